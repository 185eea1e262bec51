"""MOTChallenge text files, embedding/context sidecars and the JSON run configuration."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .core import BoundingBox, FrameObservations
from .forecaster import ForecasterConfig, TrainConfig
from .motion import KalmanConfig

log = logging.getLogger(__name__)

PRECISION = 6


class MotFormatError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.path = path
        self.line_no = line_no


class MotRecord(NamedTuple):
    frame: int
    id: int
    box: BoundingBox
    conf: float = 1.0
    flag: Optional[str] = None


def _fmt(v: float) -> str:
    s = f"{v:.{PRECISION}f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def read_mot(path) -> dict[int, list[MotRecord]]:
    """Parse a 10-field MOTChallenge file into frame-grouped centroid-form records.

    An optional 11th field carries the detected/forecasted flag written in
    extended mode.
    """
    frames: dict[int, list[MotRecord]] = {}
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) not in (10, 11):
                raise MotFormatError(path, no, f"expected 10 fields, got {len(parts)}")
            try:
                frame = int(float(parts[0]))
                tid = int(float(parts[1]))
                left, top, w, h, conf = (float(v) for v in parts[2:7])
            except ValueError as exc:
                raise MotFormatError(path, no, f"non-numeric field ({exc})") from None
            if not all(math.isfinite(v) for v in (left, top, w, h, conf)):
                raise MotFormatError(path, no, "non-finite value")
            if frame < 1:
                raise MotFormatError(path, no, f"frame must be >= 1, got {frame}")
            if w <= 0 or h <= 0:
                log.warning("%s:%d: skipping box with non-positive size", path, no)
                continue
            flag = parts[10] if len(parts) == 11 else None
            frames.setdefault(frame, []).append(
                MotRecord(frame, tid, BoundingBox.from_tlwh(left, top, w, h), conf, flag))
    return dict(sorted(frames.items()))


def write_mot(records: Iterable[MotRecord], path, extended: bool = False) -> None:
    rows = sorted(records, key=lambda r: (r.frame, r.id))
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            left, top, w, h = r.box.to_tlwh() if isinstance(r.box, BoundingBox) else \
                BoundingBox(*r.box).to_tlwh()
            fields_ = [str(int(r.frame)), str(int(r.id)), _fmt(left), _fmt(top), _fmt(w), _fmt(h),
                       _fmt(r.conf), "-1", "-1", "-1"]
            if extended:
                fields_.append(r.flag or "detected")
            fh.write(",".join(fields_) + "\n")


def flatten(frames: dict[int, list[MotRecord]]) -> list[MotRecord]:
    return [r for f in sorted(frames) for r in frames[f]]


def group_by_id(frames: dict[int, list[MotRecord]]) -> dict[int, list[tuple[int, BoundingBox]]]:
    tracks: dict[int, list[tuple[int, BoundingBox]]] = {}
    for f in sorted(frames):
        for r in frames[f]:
            tracks.setdefault(r.id, []).append((f, r.box))
    return tracks


# ------------------------------------------------------------- sidecars

def write_vectors(path, rows: Iterable[tuple], width: int, key_names=("frame", "det_index"),
                  prefix: str = "e") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*key_names, *(f"{prefix}{i}" for i in range(width))])
        for row in rows:
            *keys, vec = row
            w.writerow([*map(int, keys), *(_fmt(float(v)) for v in vec)])


def _csv_rows(path):
    """Yield ``(line_no, row)`` for non-empty rows; decoding and csv errors carry the line."""
    with open(path, newline="", encoding="utf-8", errors="replace") as fh:
        reader = csv.reader(fh)
        while True:
            try:
                row = next(reader)
            except StopIteration:
                return
            except csv.Error as exc:
                raise MotFormatError(path, reader.line_num, str(exc)) from None
            if row:
                yield reader.line_num, row


def read_embeddings(path) -> tuple[int, dict[tuple[int, int], np.ndarray]]:
    """Return ``(E, {(frame, det_index): unit vector})``."""
    out = {}
    rows = _csv_rows(path)
    header = next(rows, (1, None))[1]
    if header is None:
        return 0, out
    dim = len(header) - 2
    if dim < 1 or [h.strip() for h in header[:2]] != ["frame", "det_index"]:
        raise MotFormatError(path, 1, "header must be frame,det_index,e0..")
    for no, row in rows:
        if len(row) != dim + 2:
            raise MotFormatError(path, no, f"expected {dim} values, got {len(row) - 2}")
        try:
            key = (int(row[0]), int(row[1]))
            vec = np.array([float(v) for v in row[2:]])
        except ValueError as exc:
            raise MotFormatError(path, no, f"non-numeric field ({exc})") from None
        norm = np.linalg.norm(vec)
        if not np.isfinite(norm) or norm == 0:
            raise MotFormatError(path, no, "embedding must be finite and nonzero")
        out[key] = vec / norm
    return dim, out


def read_contexts(path) -> dict[int, np.ndarray]:
    out = {}
    rows = _csv_rows(path)
    header = next(rows, (1, None))[1]
    if header is None:
        return out
    for no, row in rows:
        if len(row) != len(header):
            raise MotFormatError(path, no, f"expected {len(header)} fields, got {len(row)}")
        try:
            out[int(row[0])] = np.array([float(v) for v in row[1:]])
        except ValueError as exc:
            raise MotFormatError(path, no, f"non-numeric field ({exc})") from None
    return out


def build_observations(dets: dict[int, list[MotRecord]], embeddings: Optional[dict] = None,
                       emb_dim: int = 0, contexts: Optional[dict[int, np.ndarray]] = None,
                       n_frames: Optional[int] = None) -> list[FrameObservations]:
    """Join detections with their sidecars; every frame up to the last is present."""
    last = max([*dets.keys(), *(contexts or {}).keys(), n_frames or 0, 0])
    first = min([*dets.keys(), 1]) if dets else 1
    fallback = np.ones(emb_dim) / math.sqrt(emb_dim) if emb_dim else None
    missing = 0
    out = []
    for f in range(first, last + 1):
        recs = dets.get(f, [])
        embs = []
        if emb_dim:
            for i in range(len(recs)):
                v = embeddings.get((f, i)) if embeddings else None
                if v is None:
                    missing += 1
                    v = fallback
                embs.append(v)
        emb = np.asarray(embs).reshape(len(recs), emb_dim)
        ctx = contexts.get(f) if contexts else None
        out.append(FrameObservations(f, [r.box for r in recs], [r.conf for r in recs], emb, ctx))
    if missing:
        log.warning("%d detections had no embedding; using the uniform fallback vector", missing)
    return out


# ---------------------------------------------------------------- config

@dataclass
class TrackerConfig:
    p: int = 10
    q: int = 60
    det_conf_thresh: float = 0.4
    lambda_fuse: float = 0.75
    l_fuse: int = 10
    tau_fuse: float = 0.4
    tau_iou: float = 0.5
    lambda_occ: float = 0.5
    max_time_occ: int = 20
    thresh_occ: float = 0.55
    max_lost: int = 30
    frame_w: float = 1088.0
    frame_h: float = 608.0
    predictor: str = "cv"
    embedding_momentum: float = 0.9
    use_fusion: bool = True
    use_iou: bool = True
    use_occlusion: bool = True

    def violations(self) -> list[str]:
        errs = []
        for name in ("det_conf_thresh", "lambda_fuse", "tau_fuse", "tau_iou", "lambda_occ",
                     "thresh_occ", "embedding_momentum"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                errs.append(f"tracker.{name} must lie in [0, 1] (got {v})")
        if self.p < 2:
            errs.append(f"tracker.p must be >= 2 (got {self.p})")
        if self.q < 1:
            errs.append(f"tracker.q must be >= 1 (got {self.q})")
        if not 1 <= self.l_fuse <= self.q:
            errs.append(f"tracker.l_fuse must lie in [1, q={self.q}] (got {self.l_fuse})")
        if self.max_time_occ < 1:
            errs.append("tracker.max_time_occ must be >= 1")
        if self.max_time_occ > self.max_lost:
            errs.append(f"tracker.max_time_occ ({self.max_time_occ}) must be <= max_lost ({self.max_lost})")
        if self.frame_w <= 0 or self.frame_h <= 0:
            errs.append("tracker.frame_w and frame_h must be > 0")
        if self.predictor not in ("cv", "kalman", "learned"):
            errs.append(f"tracker.predictor must be cv, kalman or learned (got {self.predictor!r})")
        if not (self.use_fusion or self.use_iou or self.use_occlusion):
            errs.append("at least one association stage must be enabled")
        if not (self.use_fusion or self.use_iou):
            errs.append("occlusion forecasting alone cannot match detections; enable fusion or IOU")
        return errs


@dataclass
class RunConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    forecaster: ForecasterConfig = field(default_factory=ForecasterConfig)
    kalman: KalmanConfig = field(default_factory=KalmanConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)

    def violations(self) -> list[str]:
        return self.tracker.violations() + self.forecaster.violations() + self.training.violations()

    def to_dict(self) -> dict:
        return asdict(self)


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


_SECTIONS = {"tracker": TrackerConfig, "forecaster": ForecasterConfig, "kalman": KalmanConfig,
             "training": TrainConfig}


def config_from_dict(doc: dict) -> RunConfig:
    problems = []
    if not isinstance(doc, dict):
        raise ConfigError(["configuration must be a JSON object"])
    kwargs = {}
    for key, value in doc.items():
        if key == "paths":
            if not isinstance(value, dict):
                problems.append("paths must be an object")
            else:
                kwargs["paths"] = dict(value)
            continue
        cls = _SECTIONS.get(key)
        if cls is None:
            problems.append(f"unknown section {key!r}")
            continue
        if not isinstance(value, dict):
            problems.append(f"section {key!r} must be an object")
            continue
        known = {f.name: f for f in fields(cls)}
        sub = {}
        for k, v in value.items():
            if k not in known:
                problems.append(f"unknown key {key}.{k}")
                continue
            default = getattr(cls(), k)
            if isinstance(default, bool) and not isinstance(v, bool):
                problems.append(f"{key}.{k} must be a boolean")
                continue
            if isinstance(default, (int, float)) and not isinstance(default, bool):
                if isinstance(v, bool) or not isinstance(v, (int, float)) and v is not None:
                    problems.append(f"{key}.{k} must be numeric")
                    continue
                if isinstance(default, int) and isinstance(v, float) and not v.is_integer():
                    problems.append(f"{key}.{k} must be an integer")
                    continue
                if isinstance(default, int) and v is not None:
                    v = int(v)
            sub[k] = v
        kwargs[key] = cls(**sub)
    cfg = RunConfig(**kwargs)
    problems += cfg.violations()
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return config_from_dict({})
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
    return config_from_dict(doc)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
