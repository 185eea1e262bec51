"""Glue for the ablation grids: tracking runs, forecast scoring and table output."""
from __future__ import annotations

import csv
import dataclasses
import logging
from typing import Optional, Sequence

import numpy as np

from .association import outputs_to_frames, predictor_factory, run_sequence
from .forecaster import (ForecasterConfig, ForecasterParams, PastSequence, TrainConfig,
                         forecast_batch, samples_from_tracks, train)
from .io import TrackerConfig, group_by_id
from .metrics import ForecastReport, TrackingReport, clear_mot, evaluate_forecasts
from .motion import KalmanConfig, cv_predict, kf_forecast, kf_init, kf_predict_step, kf_update_step
from .simdata import Scene, generate, make_suite

log = logging.getLogger(__name__)

# (fusion, iou, occlusion) in the row order of the component table
COMPONENT_ROWS = (
    (True, False, False),
    (True, True, False),
    (False, True, False),
    (False, True, True),
    (True, False, True),
    (True, True, True),
)
PREDICTOR_ROWS = ("cv", "kalman", "learned")
SIBLING_BASE_SEED = 1000


def run_tracking(scene: Scene, cfg: TrackerConfig, kind: Optional[str] = None,
                 params: Optional[ForecasterParams] = None, kalman: Optional[KalmanConfig] = None):
    """Track a generated scene and score it against its ground truth."""
    kind = kind or cfg.predictor
    factory = predictor_factory(kind, params, kalman)
    observations = scene.observations
    if kind == "learned" and params is not None:
        observations = [_fit_context(o, params.config.embed_dim) for o in observations]
    outputs, tracker = run_sequence(observations, cfg, factory)
    report = clear_mot(scene.gt, outputs_to_frames(outputs))
    return report, outputs, tracker


def _fit_context(obs, width: int):
    ctx = obs.context
    if ctx is not None and len(ctx) == width:
        return obs
    return dataclasses.replace(obs, context=None)


def forecast_fn(kind: str, q: int, params: Optional[ForecasterParams] = None,
                kalman: Optional[KalmanConfig] = None, contexts: Optional[dict] = None):
    """Return ``(predict, batch_predict)`` for :func:`evaluate_forecasts`."""
    if kind == "cv":
        return (lambda past, frame: cv_predict(past, q).boxes), None
    if kind == "kalman":
        def predict(past, frame):
            state = kf_init(past[0], kalman)
            for box in past[1:]:
                state = kf_update_step(kf_predict_step(state, kalman), box, kalman)
            return kf_forecast(state, q, kalman).boxes
        return predict, None
    if kind == "learned":
        if params is None:
            raise ValueError("the learned predictor needs trained parameters")
        fc = params.config
        if q > fc.q:
            raise ValueError(f"checkpoint forecasts {fc.q} frames; cannot score q={q}")

        def batch_predict(pasts, frames):
            ctx = None
            if contexts:
                zero = np.zeros(fc.embed_dim)
                ctx = []
                for f in frames:
                    c = contexts.get(f)
                    ctx.append(c if c is not None and len(c) == fc.embed_dim else zero)
            seqs = [PastSequence.from_boxes(b, fc.p) for b in pasts]
            out = []
            for i in range(0, len(seqs), 512):
                out.append(forecast_batch(seqs[i:i + 512], None if ctx is None else ctx[i:i + 512], params))
            return np.concatenate(out)[:, :q]
        return None, batch_predict
    raise ValueError(f"unknown predictor {kind!r}")


def score_forecasts(gt, kind: str, p: int, q: int, params=None, kalman=None, contexts=None,
                    strict: bool = True) -> ForecastReport:
    predict, batch = forecast_fn(kind, q, params, kalman, contexts)
    return evaluate_forecasts(gt, predict, p, q, strict, batch_predict=batch)


def sibling_samples(suites: Sequence[str], n_seeds: int, cfg: ForecasterConfig, stride: int = 2,
                    base_seed: int = SIBLING_BASE_SEED, use_context: bool = True):
    """Training windows from re-seeded copies of the named suites.

    The copies share each suite's recipe but draw a fresh layout, so the
    pinned evaluation scenes stay held out.
    """
    samples = []
    for name in suites:
        for k in range(n_seeds):
            scene = generate(make_suite(name, seed=base_seed + k))
            ctx = scene.contexts() if use_context else None
            if ctx and any(len(c) != cfg.embed_dim for c in ctx.values()):
                ctx = None
            tracks = {tid: [(f, tuple(b)) for f, b in rows] for tid, rows in group_by_id(scene.gt).items()}
            samples += samples_from_tracks(tracks, cfg, ctx, stride=stride)
    return samples


def train_on_siblings(suites: Sequence[str], cfg: ForecasterConfig, settings: TrainConfig,
                      n_seeds: int = 6, stride: int = 2, use_context: bool = True):
    samples = sibling_samples(suites, n_seeds, cfg, stride, use_context=use_context)
    log.info("training on %d windows from %d sibling scenes", len(samples), n_seeds * len(suites))
    return train(samples, cfg, settings)


def component_grid(scene: Scene, cfg: TrackerConfig, kind: Optional[str] = None,
                   params=None, kalman=None) -> list[dict]:
    rows = []
    for fusion, iou, occ in COMPONENT_ROWS:
        sub = dataclasses.replace(cfg, use_fusion=fusion, use_iou=iou, use_occlusion=occ)
        report, _, tracker = run_tracking(scene, sub, kind, params, kalman)
        rows.append({"suite": scene.spec.name, "fusion": int(fusion), "iou": int(iou), "occlusion": int(occ),
                     **_tracking_cols(report), "forecast_kept": tracker.stats.forecast_kept})
    return rows


def predictor_grid(scene: Scene, cfg: TrackerConfig, p: int, q: int, params=None, kalman=None,
                   kinds: Sequence[str] = PREDICTOR_ROWS) -> list[dict]:
    rows = []
    for kind in kinds:
        report, _, _ = run_tracking(scene, dataclasses.replace(cfg, predictor=kind), kind, params, kalman)
        fr = score_forecasts(scene.gt, kind, p, q, params, kalman, scene.contexts())
        rows.append({"suite": scene.spec.name, "predictor": kind, **_tracking_cols(report),
                     "aiou": fr.aiou, "fiou": fr.fiou, "ade": fr.ade, "fde": fr.fde,
                     "anchors": fr.sample_count})
    return rows


def _tracking_cols(r: TrackingReport) -> dict:
    return {"idf1": r.idf1, "mt": r.mt, "ids": r.id_switches, "mota": r.mota}


def _cell(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def write_table(rows: Sequence[dict], md_path=None, csv_path=None, title: str = "") -> str:
    if not rows:
        raise ValueError("empty table")
    cols = list(rows[0])
    lines = [f"### {title}", ""] if title else []
    lines.append("| " + " | ".join(cols) + " |")
    lines.append("|" + "---|" * len(cols))
    for r in rows:
        lines.append("| " + " | ".join(_cell(r[c]) for c in cols) + " |")
    text = "\n".join(lines) + "\n"
    if md_path is not None:
        with open(md_path, "w") as fh:
            fh.write(text)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in rows:
                w.writerow([_cell(r[c]) for c in cols])
    return text
