"""Online tracker: track lifecycle plus three-stage association.

Per frame: (1) appearance fused with short-term forecasts, (2) IOU between
predicted and detected boxes, (3) occlusion forecasting for tracks left
unmatched. Tracks that survive none of the three become Lost and are removed
once their lost time exceeds ``max_lost``.
"""
from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .assignment import solve
from .core import (BoundingBox, BoxWithVelocity, FrameObservations, Velocity,
                   center_distance_normalized, cosine_distance, iou_distance, normalize_rows)
from .forecaster import ForecasterParams, LearnedPredictor
from .io import MotRecord, TrackerConfig
from .motion import ConstantVelocityPredictor, ForecastHorizon, KalmanConfig, KalmanPredictor, MotionPredictor

log = logging.getLogger(__name__)

DETECTED = "detected"
FORECASTED = "forecasted"


class TrackState(enum.Enum):
    New = "new"
    Tracked = "tracked"
    Lost = "lost"
    Removed = "removed"


_LEGAL = {
    (TrackState.New, TrackState.Tracked),
    (TrackState.New, TrackState.Removed),
    (TrackState.Tracked, TrackState.Lost),
    (TrackState.Lost, TrackState.Tracked),
    (TrackState.Lost, TrackState.Removed),
}


@dataclass
class TrackRecord:
    id: int
    state: TrackState
    history: deque
    embedding: np.ndarray
    predictor: MotionPredictor
    last_frame: int
    horizon: Optional[ForecastHorizon] = None
    lost_time: int = 0
    stale: bool = True

    def transition(self, new: TrackState) -> None:
        if new is self.state:
            return
        if (self.state, new) not in _LEGAL:
            raise RuntimeError(f"illegal track transition {self.state.name} -> {new.name} (id {self.id})")
        self.state = new

    @property
    def last_box(self) -> BoundingBox:
        return self.history[-1].box

    def offset(self, frame: int) -> int:
        """Horizon index of ``frame``."""
        return frame - self.horizon.origin_frame if self.horizon is not None else 0

    def forecast_window(self, frame: int, l: int) -> Optional[np.ndarray]:
        if self.horizon is None:
            return None
        q = len(self.horizon)
        start = min(max(self.offset(frame), 0), max(q - l, 0))
        return self.horizon.boxes[start:start + l]

    def predicted_box(self, frame: int) -> BoundingBox:
        if self.horizon is None:
            return self.last_box
        i = min(max(self.offset(frame), 0), len(self.horizon) - 1)
        return self.horizon.box(i)


def fuse_motion(reid_dist, tracks: Sequence, detections: Sequence, lam: float, l: int,
                frame: Optional[int] = None) -> np.ndarray:
    """Fuse appearance distance with overlap of each track's short-term forecasts.

    The per-detection IOU distance to the track's last box is multiplied by the
    smallest IOU distance over ``l`` forecast boxes; where the product reaches 1
    the appearance distance is doubled.
    """
    reid = np.array(reid_dist, dtype=np.float64)
    if reid.shape != (len(tracks), len(detections)):
        raise ValueError(f"reid_dist shape {reid.shape} != ({len(tracks)}, {len(detections)})")
    costs = np.empty_like(reid)
    for i, tr in enumerate(tracks):
        d = iou_distance([tr.last_box], detections)[0]
        window = tr.forecast_window(frame, l) if frame is not None else (
            tr.horizon.boxes[:l] if tr.horizon is not None else None)
        if window is not None and len(window):
            m = iou_distance(window, detections).min(axis=0)
            d = d * m
        reid[i, d >= 1] *= 2.0
        costs[i] = lam * reid[i] + (1.0 - lam) * d
    return costs


def occlusion_forecast(track: TrackRecord, cfg: TrackerConfig) -> Optional[BoundingBox]:
    """Forecast box for an unmatched track, kept only when it looks occluded rather than gone."""
    if track.horizon is None:
        return None
    base = track.lost_time / cfg.max_time_occ
    box = track.horizon.box(min(track.lost_time, len(track.horizon) - 1))
    dist = center_distance_normalized(box, cfg.frame_w, cfg.frame_h)
    cost = cfg.lambda_occ * dist + (1.0 - cfg.lambda_occ) * base
    return box if cost < cfg.thresh_occ else None


def smooth_embedding(old, new, momentum: float) -> np.ndarray:
    v = momentum * np.asarray(old, dtype=np.float64) + (1.0 - momentum) * np.asarray(new, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("smoothed embedding vanished")
    return v / n


@dataclass
class StepOutput:
    frame: int
    id: int
    box: BoundingBox
    flag: str

    def record(self) -> MotRecord:
        return MotRecord(self.frame, self.id, self.box, 1.0, self.flag)


@dataclass
class TrackerStats:
    frames: int = 0
    tracks_created: int = 0
    stage_matches: dict = field(default_factory=lambda: {"fusion": 0, "iou": 0})
    forecast_kept: int = 0
    removed: int = 0
    total_matches: int = 0

    def as_dict(self) -> dict:
        return {"frames": self.frames, "tracks_created": self.tracks_created,
                "stage_matches": dict(self.stage_matches), "forecast_kept": self.forecast_kept,
                "removed": self.removed, "total_matches": self.total_matches}


def predictor_factory(kind: str, params: Optional[ForecasterParams] = None,
                      kalman: Optional[KalmanConfig] = None) -> Callable[[], MotionPredictor]:
    if kind == "cv":
        return ConstantVelocityPredictor
    if kind == "kalman":
        return lambda: KalmanPredictor(kalman)
    if kind == "learned":
        if params is None:
            raise ValueError("the learned predictor needs trained parameters")
        return lambda: LearnedPredictor(params)
    raise ValueError(f"unknown predictor {kind!r}")


class Tracker:
    """One instance per sequence; feed frames in increasing order through :meth:`step`."""

    def __init__(self, cfg: Optional[TrackerConfig] = None,
                 predictor: Optional[Callable[[], MotionPredictor]] = None):
        self.cfg = cfg or TrackerConfig()
        errs = self.cfg.violations()
        if errs:
            raise ValueError("; ".join(errs))
        self.make_predictor = predictor or predictor_factory(self.cfg.predictor)
        self.tracks: list[TrackRecord] = []
        self.removed: list[TrackRecord] = []
        self.next_id = 1
        self.last_frame_index: Optional[int] = None
        self.stats = TrackerStats()

    # -- helpers

    def _refresh_horizons(self, obs: FrameObservations) -> None:
        for tr in self.tracks:
            if tr.stale and tr.predictor.ready and tr.state is not TrackState.New:
                tr.horizon = tr.predictor.predict(self.cfg.q, obs.context, tr.last_frame + 1)
            tr.stale = False

    def _spawn(self, frame: int, box: BoundingBox, emb: np.ndarray, confirmed: bool) -> TrackRecord:
        pred = self.make_predictor()
        pred.observe(box)
        hist = deque([BoxWithVelocity(box, Velocity(0.0, 0.0, 0.0, 0.0))], maxlen=self.cfg.p)
        tr = TrackRecord(self.next_id, TrackState.Tracked if confirmed else TrackState.New, hist,
                         emb, pred, frame)
        self.next_id += 1
        self.stats.tracks_created += 1
        return tr

    def _update(self, tr: TrackRecord, frame: int, box: BoundingBox, emb: np.ndarray) -> None:
        gap = max(frame - tr.last_frame, 1)
        prev = tr.last_box
        vel = Velocity(*((b - a) / gap for a, b in zip(prev, box)))
        tr.history.append(BoxWithVelocity(box, vel))
        tr.predictor.observe(box, gap)
        if emb.size and tr.embedding.size:
            tr.embedding = smooth_embedding(tr.embedding, emb, self.cfg.embedding_momentum)
        tr.last_frame = frame
        tr.lost_time = 0
        tr.stale = True
        tr.transition(TrackState.Tracked)

    # -- main loop

    def step(self, obs: FrameObservations) -> list[StepOutput]:
        cfg = self.cfg
        frame = obs.frame_index
        if self.last_frame_index is not None and frame <= self.last_frame_index:
            raise ValueError(f"frame indices must increase: {frame} after {self.last_frame_index}")
        first_frame = self.last_frame_index is None
        self.last_frame_index = frame
        self.stats.frames += 1

        keep = [i for i, c in enumerate(obs.confidences) if c >= cfg.det_conf_thresh]
        dets = [obs.detections[i] for i in keep]
        embs = obs.embeddings[keep] if obs.embeddings.size else np.zeros((len(keep), 0))

        self._refresh_horizons(obs)
        matched: dict[int, int] = {}  # track position -> detection index
        free_dets = list(range(len(dets)))

        # Stage 1: appearance + short-term forecast fusion
        if cfg.use_fusion:
            pool = [k for k, t in enumerate(self.tracks)
                    if t.state in (TrackState.Tracked, TrackState.Lost, TrackState.New)]
            if pool and free_dets:
                trs = [self.tracks[k] for k in pool]
                if embs.shape[1] and all(t.embedding.size for t in trs):
                    reid = cosine_distance(np.array([t.embedding for t in trs]), embs[free_dets])
                else:
                    reid = np.zeros((len(trs), len(free_dets)))
                cost = fuse_motion(reid, trs, [dets[j] for j in free_dets], cfg.lambda_fuse, cfg.l_fuse, frame)
                res = solve(cost, cfg.tau_fuse)
                for r, c in res.matches:
                    matched[pool[r]] = free_dets[c]
                self.stats.stage_matches["fusion"] += len(res.matches)
                free_dets = [free_dets[c] for c in res.unmatched_cols]

        # Stage 2: IOU between predicted boxes and remaining detections
        if cfg.use_iou:
            pool = [k for k, t in enumerate(self.tracks) if k not in matched
                    and t.state in (TrackState.Tracked, TrackState.New)]
            if pool and free_dets:
                boxes = [self.tracks[k].predicted_box(frame) for k in pool]
                res = solve(iou_distance(boxes, [dets[j] for j in free_dets]), cfg.tau_iou)
                for r, c in res.matches:
                    matched[pool[r]] = free_dets[c]
                self.stats.stage_matches["iou"] += len(res.matches)
                free_dets = [free_dets[c] for c in res.unmatched_cols]

        out: list[StepOutput] = []
        for k, j in matched.items():
            tr = self.tracks[k]
            self._update(tr, frame, dets[j], embs[j] if embs.shape[1] else np.zeros(0))
            out.append(StepOutput(frame, tr.id, dets[j], DETECTED))
        self.stats.total_matches += len(matched)

        # Stage 3 and lifecycle for unmatched tracks
        survivors = []
        for k, tr in enumerate(self.tracks):
            if k in matched:
                survivors.append(tr)
                continue
            if tr.state is TrackState.New:
                tr.transition(TrackState.Removed)
            elif tr.state is TrackState.Tracked:
                box = occlusion_forecast(tr, cfg) if cfg.use_occlusion else None
                if box is not None:
                    out.append(StepOutput(frame, tr.id, box, FORECASTED))
                    self.stats.forecast_kept += 1
                else:
                    tr.transition(TrackState.Lost)
                tr.lost_time += 1
            else:
                tr.lost_time += 1
            if tr.state is not TrackState.New and tr.lost_time > cfg.max_lost:
                if tr.state is TrackState.Tracked:
                    tr.transition(TrackState.Lost)
                tr.transition(TrackState.Removed)
            if tr.state is TrackState.Removed:
                self.removed.append(tr)
                self.stats.removed += 1
            else:
                survivors.append(tr)
        self.tracks = survivors

        for j in free_dets:
            tr = self._spawn(frame, dets[j], embs[j] if embs.shape[1] else np.zeros(0), confirmed=first_frame)
            self.tracks.append(tr)
            if tr.state is TrackState.Tracked:
                out.append(StepOutput(frame, tr.id, dets[j], DETECTED))
        out.sort(key=lambda o: o.id)
        return out

    def track_state(self, track_id: int) -> Optional[TrackState]:
        for tr in self.tracks + self.removed:
            if tr.id == track_id:
                return tr.state
        return None


def run_sequence(observations: Sequence[FrameObservations], cfg: Optional[TrackerConfig] = None,
                 predictor: Optional[Callable[[], MotionPredictor]] = None) -> tuple[list[StepOutput], Tracker]:
    tracker = Tracker(cfg, predictor)
    out = []
    for obs in observations:
        out.extend(tracker.step(obs))
    return out, tracker


def outputs_to_frames(outputs: Sequence[StepOutput]) -> dict[int, list[MotRecord]]:
    frames: dict[int, list[MotRecord]] = {}
    for o in outputs:
        frames.setdefault(o.frame, []).append(o.record())
    return frames
